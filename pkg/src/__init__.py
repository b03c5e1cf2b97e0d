"""luknet - stability lab for Lu-Kumar queueing networks"""
__version__ = "1.0.0"
