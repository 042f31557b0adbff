from django.apps import AppConfig


class ReduceConfig(AppConfig):
    name = 'reduce'
