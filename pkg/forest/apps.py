from django.apps import AppConfig


class ForestConfig(AppConfig):
    name = 'forest'
