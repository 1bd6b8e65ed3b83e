"""Nonparametric quantile LSTM forecasting with end-to-end median imputation."""

__version__ = "0.1.0"
