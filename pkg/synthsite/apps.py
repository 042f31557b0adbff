from django.apps import AppConfig


class SynthsiteConfig(AppConfig):
    name = 'synthsite'
