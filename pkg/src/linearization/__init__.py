# Symplectic conjugations of the normal linearized operator
