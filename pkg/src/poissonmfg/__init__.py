"""Mean-field games with common self-exciting Poisson noise."""
