# Run reports and their persistence
