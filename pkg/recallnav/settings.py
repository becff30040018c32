"""
Django settings for the recallnav project.

Every navigation tunable is read from the environment with a default, so a `.env`
file (loaded by manage.py) or the process environment can reconfigure a run.
Command-line flags of the run commands override these values per invocation.
"""

import os
from pathlib import Path

BASE_DIR = Path(__file__).resolve().parent.parent


# SECURITY WARNING: keep the secret key used in production secret!
SECRET_KEY = os.getenv('DJANGO_SECRET_KEY', 'django-insecure-recallnav-local-only-5w3x!q9z@l2m')

DEBUG = os.getenv('DJANGO_DEBUG', 'False') == 'True'

ALLOWED_HOSTS: list[str] = []


INSTALLED_APPS = [
    'environments',
    'embeddings',
    'memory',
    'navigation',
    'reflection',
    'policies',
    'runs',
]

TEMPLATES = [
    {
        'BACKEND': 'django.template.backends.django.DjangoTemplates',
        'DIRS': [],
        'APP_DIRS': True,
        'OPTIONS': {
            'context_processors': [],
        },
    },
]


DATABASES = {
    'default': {
        'ENGINE': 'django.db.backends.sqlite3',
        'NAME': BASE_DIR / 'data' / 'db.sqlite3',
    }
}

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'

USE_TZ = True

TIME_ZONE = 'UTC'


LOG_LEVEL = os.getenv('LOG_LEVEL', 'INFO')

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'plain': {
            'format': '%(asctime)s %(levelname)s %(name)s: %(message)s',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'formatter': 'plain',
        },
    },
    'root': {
        'handlers': ['console'],
        'level': LOG_LEVEL,
    },
}


# Embeddings
EMBEDDING_DIMENSION = int(os.getenv('EMBEDDING_DIMENSION', '512'))
EMBEDDING_HASH_KEY = os.getenv('EMBEDDING_HASH_KEY', 'recallnav')
EMBEDDING_API_BASE = os.getenv('EMBEDDING_API_BASE', '')
EMBEDDING_API_KEY = os.getenv('EMBEDDING_API_KEY', '')
EMBEDDING_MODEL = os.getenv('EMBEDDING_MODEL', 'clip-vit-base-patch32')
EMBEDDING_TIMEOUT_SECONDS = float(os.getenv('EMBEDDING_TIMEOUT_SECONDS', '30'))
FUSION_WEIGHTS_PATH = os.getenv('FUSION_WEIGHTS_PATH', '')

# Experience memory filter
MEMORY_SIMILAR_ROUTE_THRESHOLD = float(os.getenv('MEMORY_SIMILAR_ROUTE_THRESHOLD', '0.95'))
MEMORY_RATIONALE_THRESHOLD = float(os.getenv('MEMORY_RATIONALE_THRESHOLD', '0.95'))

# Navigation loop
NAVIGATION_SUCCESS_RADIUS = float(os.getenv('NAVIGATION_SUCCESS_RADIUS', '3.0'))
NAVIGATION_MAX_STEPS = int(os.getenv('NAVIGATION_MAX_STEPS', '15'))
NAVIGATION_RETRIEVAL_THRESHOLD = float(os.getenv('NAVIGATION_RETRIEVAL_THRESHOLD', '0.55'))
NAVIGATION_PARSE_RETRIES = int(os.getenv('NAVIGATION_PARSE_RETRIES', '2'))
NAVIGATION_RETRIEVAL_TOP_K = int(os.getenv('NAVIGATION_RETRIEVAL_TOP_K', '1'))

# Decision backends
GREEDY_STOP_THRESHOLD = float(os.getenv('GREEDY_STOP_THRESHOLD', '0.6'))
CHAT_API_BASE = os.getenv('CHAT_API_BASE', 'https://api.openai.com/v1')
CHAT_API_KEY = os.getenv('CHAT_API_KEY', '')
CHAT_MODEL = os.getenv('CHAT_MODEL', 'gpt-4o')
CHAT_TIMEOUT_SECONDS = float(os.getenv('CHAT_TIMEOUT_SECONDS', '60'))
CHAT_MAX_ATTEMPTS = int(os.getenv('CHAT_MAX_ATTEMPTS', '2'))
CHAT_BACKOFF_SECONDS = float(os.getenv('CHAT_BACKOFF_SECONDS', '1.0'))
CHAT_MAX_IN_FLIGHT = int(os.getenv('CHAT_MAX_IN_FLIGHT', '4'))

# Runs
RUN_CHECKPOINT_EVERY = int(os.getenv('RUN_CHECKPOINT_EVERY', '10'))
