# Newton-Nash-Moser solver for invariant tori
