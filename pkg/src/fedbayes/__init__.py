"""FedBayes aggregation and a small deterministic federated-learning simulator."""

__version__ = "0.1.0"
