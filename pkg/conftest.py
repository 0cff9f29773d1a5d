import os

import django

os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'dcolab.settings')
django.setup()
