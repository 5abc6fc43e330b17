"""
URL configuration for the run registry API.
"""

from django.urls import path
from . import views

app_name = 'learner'

urlpatterns = [
    path('', views.TrainingRunListView.as_view(), name='run-list'),
    path('<str:run_id>/', views.TrainingRunDetailView.as_view(), name='run-detail'),
]
