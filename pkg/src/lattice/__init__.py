# Angle lattice, Fourier fields and weighted norms
