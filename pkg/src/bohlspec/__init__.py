"""Spectra of nonautonomous linear ODEs."""
__version__ = "0.1.0"
