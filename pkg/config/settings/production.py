"""
Django Production Settings - Shared run registry on a managed database.

Usage: DJANGO_SETTINGS_MODULE=config.settings.production
"""

from .base import *

# SECURITY - All values MUST come from environment
SECRET_KEY = config('SECRET_KEY')
DEBUG = False

ALLOWED_HOSTS = config('ALLOWED_HOSTS', cast=Csv())

# Database - PostgreSQL with SSL
DATABASES = {
    'default': dj_database_url.config(
        default=config('DATABASE_URL'),
        conn_max_age=600,
        ssl_require=True,
    )
}

# Security settings
SECURE_SSL_REDIRECT = True
SECURE_PROXY_SSL_HEADER = ('HTTP_X_FORWARDED_PROTO', 'https')
SESSION_COOKIE_SECURE = True
CSRF_COOKIE_SECURE = True
SECURE_CONTENT_TYPE_NOSNIFF = True
X_FRAME_OPTIONS = 'DENY'

# Logging - Minimal logging in production
LOGGING['loggers']['django']['level'] = 'WARNING'
for app_logger in ('datapipe', 'sparse_coding', 'dict_update', 'learner', 'baseline_ksvd', 'cli'):
    LOGGING['loggers'][app_logger]['level'] = config('CDL_LOG_LEVEL', default='WARNING')
