"""Knowledge-base-augmented table QA: triple retrieval engine and evaluation harness."""

__version__ = "0.1.0"
