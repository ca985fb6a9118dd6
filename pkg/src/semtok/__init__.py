"""Budget-conditioned token selection with learned channel coding and a queue-based controller."""

__version__ = "0.1.0"
