from django.apps import AppConfig


class DictUpdateConfig(AppConfig):
    name = 'dict_update'
