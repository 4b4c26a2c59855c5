"""Eigenstates and scarred functions of the 2D quartic oscillator.

Wavepackets are propagated with the split-operator FFT method, extended in
time by a complex echo-state network, and analysed through their
autocorrelation spectra.
"""

__version__ = "0.1.0"
