# Isotropic tori, symplectic chart and Taylor coefficients
