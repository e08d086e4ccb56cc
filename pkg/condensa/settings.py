"""
Django settings for the condensa project.

Condensa is a desk-scale class-incremental learning engine: it condenses stored
exemplar videos into single learned frames and replays them across tasks.
Only the parts of Django the engine uses are enabled (management commands,
templates for SVG plots, the ORM for optional run bookkeeping).
"""
import os
from pathlib import Path

from dotenv import load_dotenv

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

load_dotenv()

SECRET_KEY = os.getenv('CONDENSA_SECRET_KEY', 'condensa-local-only-key')

DEBUG = os.getenv('CONDENSA_DEBUG', 'false').lower() in ('1', 'true', 'yes')

ALLOWED_HOSTS = []


# Application definition

INSTALLED_APPS = [
    'django.contrib.auth',
    'django.contrib.contenttypes',
    'rest_framework',
    'replay',
]

TEMPLATES = [
    {
        'BACKEND': 'django.template.backends.django.DjangoTemplates',
        'DIRS': [],
        'APP_DIRS': True,
        'OPTIONS': {},
    },
]


# Database
# Only used by `run --record` to keep a history of experiment runs.

DATABASES = {
    'default': {
        'ENGINE': 'django.db.backends.sqlite3',
        'NAME': Path(os.getenv('CONDENSA_DB_PATH', BASE_DIR / 'db.sqlite3')),
    }
}

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'

USE_TZ = True
TIME_ZONE = 'UTC'


# Logging

CONDENSA_LOG_LEVEL = os.getenv('CONDENSA_LOG_LEVEL', 'INFO').upper()

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'verbose': {
            'format': '{asctime} {levelname} {name}: {message}',
            'style': '{',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'formatter': 'verbose',
        },
    },
    'loggers': {
        'replay': {
            'handlers': ['console'],
            'level': CONDENSA_LOG_LEVEL,
            'propagate': False,
        },
    },
}


# Engine configuration

def _parse_seeds(raw):
    if not raw:
        return None
    return [int(part) for part in raw.split(',') if part.strip()]


# Overrides the `seeds` list of every experiment document when set.
CONDENSA_SEED = _parse_seeds(os.getenv('CONDENSA_SEED', ''))

CONDENSA_OUTPUT_DIR = Path(os.getenv('CONDENSA_OUTPUT_DIR', BASE_DIR / 'results'))

# NaN/Inf check after every differentiable forward op
CONDENSA_CHECK_FINITE = os.getenv('CONDENSA_CHECK_FINITE', str(DEBUG)).lower() in ('1', 'true', 'yes')

CONDENSA_NUM_THREADS = int(os.getenv('CONDENSA_NUM_THREADS', '1'))
