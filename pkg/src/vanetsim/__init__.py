"""VANET co-simulation toolkit: 802.11p cell models, road traffic, eco-routing."""

__version__ = "0.1.0"
