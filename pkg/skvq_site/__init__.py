from skvq_site.celery import app as celery_app
