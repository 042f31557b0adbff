from django.apps import AppConfig


class NumcoreConfig(AppConfig):
    name = 'numcore'
