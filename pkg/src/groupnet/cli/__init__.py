"""Command-line workflows, configuration, data ingestion and the model file format."""
