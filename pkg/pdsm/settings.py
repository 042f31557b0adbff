"""
Django settings for the pdsm project.

The project has no web surface: Django provides the settings layer, logging
configuration, management commands (the CLI) and the test runner.

Every pipeline knob has its default in PDSM_DEFAULTS below. Run config files
(flat JSON with the same dotted keys) and command-line flags override them.
"""

import os
from pathlib import Path
from dotenv import load_dotenv

# Load environment variables from .env file (for local development)
load_dotenv()

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

# No sessions or signing are used; the key only keeps Django's checks quiet.
SECRET_KEY = os.environ.get('SECRET_KEY', 'pdsm-local-key')

DEBUG = os.environ.get('DEBUG', 'False').lower() in ('true', '1', 'yes')

ALLOWED_HOSTS = []


# Application definition

INSTALLED_APPS = [
    'numcore',
    'styleembed',
    'cluster',
    'taskmodel',
    'reduce',
    'forest',
    'synthsite',
    'pipeline',
    'cli',
]

# The pipeline persists to files (TNS1 tensors + JSON), never to a database.
DATABASES = {}

USE_TZ = True

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'


# Pipeline defaults (dotted keys, one namespace per app)

PDSM_DEFAULTS = {
    # synthetic cohort
    'synthsite.patients': 74,
    'synthsite.sites': 28,
    'synthsite.vendors': 3,
    'synthsite.echoes': 6,
    'synthsite.image_size': 64,
    'synthsite.heterogeneity': 1.0,
    'synthsite.noise_sigma': 0.02,
    'synthsite.responder_rate': 0.6,
    'synthsite.max_fat_fraction': 0.3,
    'synthsite.train_fraction': 0.72,
    # style model
    'styleembed.weights_dir': '',
    'styleembed.layers': '1,2',
    # pseudo-domain clustering
    'cluster.k': 5,
    'cluster.restarts': 10,
    'cluster.max_iter': 100,
    # task network
    'taskmodel.pretrain.epochs': 60,
    'taskmodel.pretrain.learning_rate': 0.01,
    'taskmodel.finetune.epochs': 30,
    'taskmodel.finetune.learning_rate': 0.002,
    'taskmodel.batch_size': 8,
    'taskmodel.momentum': 0.9,
    'taskmodel.weight_decay': 1e-4,
    'taskmodel.min_finetune_samples': 4,
    'taskmodel.use_bias': True,
    # feature reduction
    'reduce.components': 32,
    # outcome forest (0 means "auto" for max_features and "unlimited" for max_depth)
    'forest.n_trees': 200,
    'forest.max_features': 0,
    'forest.min_samples_leaf': 2,
    'forest.max_depth': 0,
    'forest.bootstrap': True,
    # pipeline
    'pipeline.baseline': 'pretrained',
    # run
    'run.seed': int(os.environ.get('PDSM_SEED', '42')),
    'run.threads': int(os.environ.get('PDSM_THREADS', '1')),
}

PDSM_LOG_LEVEL = os.environ.get('PDSM_LOG_LEVEL', 'INFO').upper()

PDSM_APP_LOGGERS = [
    'numcore', 'styleembed', 'cluster', 'taskmodel', 'reduce',
    'forest', 'synthsite', 'pipeline', 'cli',
]

# Logging configuration - everything goes to the console
LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'plain': {
            'format': '%(levelname)s %(name)s: %(message)s',
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
        'level': 'WARNING',
    },
    'loggers': {
        'django': {
            'handlers': ['console'],
            'level': 'INFO',
            'propagate': False,
        },
        **{
            name: {
                'handlers': ['console'],
                'level': PDSM_LOG_LEVEL,
                'propagate': False,
            }
            for name in PDSM_APP_LOGGERS
        },
    },
}
