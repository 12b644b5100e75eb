"""Audio-lip speech enhancement with distillation from an audio-lip-tongue teacher."""

__version__ = "0.1.0"
