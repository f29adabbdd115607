"""DeltaCharger: inverted-Delta charging robot simulation and tactile perception"""

__version__ = "1.0.0"
