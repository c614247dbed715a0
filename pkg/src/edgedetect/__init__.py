"""Federated intrusion-detection simulator: median-threshold update binarization,
Paillier secure aggregation, DP sanitization, and FedAvg/FedProx/signSGD baselines."""

__version__ = "0.1.0"
