"""Peer effects for count outcomes on grouped networks under rational expectations."""
__version__ = "0.1.0"
