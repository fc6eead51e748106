import os

import django

os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'skvq_site.settings')
django.setup()
