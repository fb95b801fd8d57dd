"""Patient-specific spine model pipeline and decompression rehearsal engine."""

__version__ = "0.1.0"
