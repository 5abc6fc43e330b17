from django.apps import AppConfig


class BaselineKsvdConfig(AppConfig):
    name = 'baseline_ksvd'
