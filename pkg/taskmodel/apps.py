from django.apps import AppConfig


class TaskmodelConfig(AppConfig):
    name = 'taskmodel'
