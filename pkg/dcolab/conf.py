from functools import partial

from django.conf import settings


def lab_setting(name):
    """Look up a laboratory default from ``settings.DCOLAB``."""
    try:
        return getattr(settings, 'DCOLAB')[name]
    except KeyError:
        raise KeyError(f"DCOLAB has no setting {name!r}") from None


def setting_default(name):
    """dataclass ``default_factory`` reading the setting when the object is built."""
    return partial(lab_setting, name)
