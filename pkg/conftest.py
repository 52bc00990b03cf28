import os

import django

os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'ppc.settings')
django.setup()
