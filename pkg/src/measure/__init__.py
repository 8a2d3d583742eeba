# Non-resonance checks and Monte-Carlo measure of the excluded frequencies
