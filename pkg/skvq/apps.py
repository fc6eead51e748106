from django.apps import AppConfig


class SkvqAppConfig(AppConfig):
    name = 'skvq'
    verbose_name = 'Sliding-window KV cache quantization'
