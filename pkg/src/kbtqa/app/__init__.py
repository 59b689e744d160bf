"""CLI, retrieval service and reasoner-input assembly."""
