"""Internet-controlled robot arm stack: wire protocol, broker, learning
store, simulated arm agent, and CLI."""

__version__ = "0.1.0"
