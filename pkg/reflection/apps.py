from django.apps import AppConfig


class ReflectionConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'reflection'
