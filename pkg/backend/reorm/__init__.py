"""Instruction-driven, interaction-consistent object removal."""

from reorm.config import APP_VERSION

__version__ = APP_VERSION
