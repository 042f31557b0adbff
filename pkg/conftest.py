import os

import django

os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'pdsm.settings')
django.setup()
