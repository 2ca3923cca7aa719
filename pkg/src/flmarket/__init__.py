"""Federated-learning marketplace simulator.

Provider-side allocation of encrypted training load, a multi-principal
contract equilibrium between mobile users and a provider, and a
straggler-aware federated training loop over a simulated homomorphic cipher.
"""

__version__ = "0.1.0"
