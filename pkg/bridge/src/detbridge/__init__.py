"""Wire-protocol server that exposes an object detector to the attack engine.

Speaks line-delimited JSON over stdio or TCP: image requests carry base64
little-endian float32 pixels, responses carry boxes with full per-class
probability vectors, and a ping answers with the served class count.
"""

from .models import EchoModel, load_model
from .server import BridgeConfig, serve

__version__ = "0.1.0"
