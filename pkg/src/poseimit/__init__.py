"""Progressive pose prediction by behavioral cloning plus adversarial imitation."""

__version__ = "0.1.0"
