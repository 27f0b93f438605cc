"""Open-vocabulary video relation detection with motion-grouped prompts."""

__version__ = "0.1.0"
