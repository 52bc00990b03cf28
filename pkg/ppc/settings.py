"""
Django settings for the ppc project.

The project has no web surface; Django provides the settings layer, the
management-command CLI and the test runner for the `refinement` app.

For the full list of settings and their values, see
https://docs.djangoproject.com/en/4.2/ref/settings/
"""

import os
from pathlib import Path

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent


# Nothing is served; the key only satisfies Django's startup checks.
SECRET_KEY = os.environ.get('PPC_SECRET_KEY', 'ppc-offline-toolkit-not-a-secret')

DEBUG = False

ALLOWED_HOSTS = []


# Application definition

INSTALLED_APPS = [
    'django.contrib.contenttypes',
    'django.contrib.auth',
    'rest_framework',
    'refinement',
]


# Internationalization

LANGUAGE_CODE = 'en-us'

TIME_ZONE = 'UTC'

USE_I18N = False

USE_TZ = True


# Pose refinement toolkit

PPC = {
    'PATCH_RESOLUTION': 512,
    'RENDER_RESOLUTION': 256,
    'MAX_MODEL_POINTS': 2000,
    'EXTERNAL_CRITIC_TIMEOUT_S': 10.0,
    'DEFAULT_REFINEMENT_CONFIG': BASE_DIR / 'refinement' / 'data' / 'refinement_default.json',
    'MESH_DIR': BASE_DIR / 'refinement' / 'data' / 'meshes',
    'WORKERS': 1,
}


# Logging

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'ppc': {
            'format': '{asctime} {levelname:<7} {name}: {message}',
            'style': '{',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'formatter': 'ppc',
        },
    },
    'loggers': {
        'refinement': {
            'handlers': ['console'],
            'level': os.environ.get('PPC_LOG_LEVEL', 'WARNING'),
            'propagate': False,
        },
    },
}
