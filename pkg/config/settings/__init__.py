# Settings module
# Usage: DJANGO_SETTINGS_MODULE=config.settings.local (or production)
