import os

# set the default Django settings module for the 'celery' program.
os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'skvq_site.settings')

# noinspection PyUnresolvedReferences
from skvq_site.celery import app  # noqa: E402, F401, imported for the worker entry point
