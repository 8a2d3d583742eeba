# kamtor: quasi-periodic invariant tori for the discrete NLS
