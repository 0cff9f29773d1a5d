"""
Django settings for the dcolab project.

The project has no web surface and no database: Django provides configuration,
logging, the ``manage.py`` command line and the test runner.

For more information on this file, see
https://docs.djangoproject.com/en/5.2/topics/settings/
"""

import os
from pathlib import Path

from dotenv import load_dotenv

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

load_dotenv(BASE_DIR / '.env')


SECRET_KEY = os.environ.get('DJANGO_SECRET_KEY', 'dcolab-local-only')

DEBUG = os.environ.get('DJANGO_DEBUG', '0') == '1'

ALLOWED_HOSTS = []


# Application definition

INSTALLED_APPS = [
    'django.contrib.contenttypes',
    'django.contrib.auth',
    'rest_framework',
    'autodiff',
    'diffusion',
    'objectives',
    'adapters',
    'sampling',
    'oracle',
    'training',
    'harness',
]

# Everything is file based; nothing talks to a database.
DATABASES = {}

LANGUAGE_CODE = 'en-us'

TIME_ZONE = 'UTC'

USE_I18N = False

USE_TZ = True

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'


# Laboratory defaults
DCOLAB = {
    'OUTPUT_ROOT': Path(os.environ.get('DCOLAB_OUTPUT_ROOT', BASE_DIR / 'runs')),
    'SCHEDULE': 'cosine',
    'EMBED_DIM': 8,
    'HIDDEN': (64, 64),
    'CONDITION_DROPOUT': 0.1,
    'OFFSET_NOISE': 0.0,
    'BETA_T': 1000.0,
    'ADAPTER_LR': 5e-5,
    'EMBEDDING_LR': 5e-4,
    'SUBJECT_RANK': 32,
    'SAMPLER_STEPS': 50,
    'SAMPLER_T_MAX': 0.99,
    'SAMPLER_T_MIN': 1e-3,
    'OMEGA_TEXT': 7.5,
    'OMEGA_CON': (2.0, 3.0, 4.0, 5.0),
    'NOISE_DRAWS': 100,
    'DELTA_GRID': 64,
    'WORKERS': 1,
    'LOG_EVERY': 100,
    'BASE_LR': 5e-3,
    'BASE_BATCH': 64,
    'BASE_STEPS': 2000,
}


LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'verbose': {
            'format': '{levelname} {asctime} {name} {message}',
            'style': '{',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'formatter': 'verbose',
        },
    },
    'root': {
        'handlers': ['console'],
        'level': os.environ.get('DCOLAB_LOG_LEVEL', 'INFO'),
    },
}
