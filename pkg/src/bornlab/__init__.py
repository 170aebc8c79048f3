"""Backscattering diffraction-tomography lab for the Schrodinger equation."""
