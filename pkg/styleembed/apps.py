from django.apps import AppConfig


class StyleembedConfig(AppConfig):
    name = 'styleembed'
