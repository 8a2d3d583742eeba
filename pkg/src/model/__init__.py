# Normal-form Hamiltonian, perturbation and residual operator
