"""HistoGraph readout over historical GNN activations."""
