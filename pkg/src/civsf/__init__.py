"""CI-VSF: causally informed variable-step forecasting of satellite image series."""

__version__ = "0.1.0"
