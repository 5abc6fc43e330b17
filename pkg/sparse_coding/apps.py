from django.apps import AppConfig


class SparseCodingConfig(AppConfig):
    name = 'sparse_coding'
