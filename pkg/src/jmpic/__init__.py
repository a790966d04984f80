"""Joint models for partly interval-censored survival outcomes with
longitudinal covariates, fitted by penalised likelihood."""

__version__ = "0.1.0"
