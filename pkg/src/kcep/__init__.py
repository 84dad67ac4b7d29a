"""Knowledge-infused complex event processing over real-time and archived streams."""

__version__ = "0.1.0"
