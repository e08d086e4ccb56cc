from django.apps import AppConfig


class ReplayConfig(AppConfig):
    name = 'replay'
    verbose_name = 'Condensed-frame replay'

    def ready(self):
        import torch
        from django.conf import settings

        torch.set_num_threads(settings.CONDENSA_NUM_THREADS)
