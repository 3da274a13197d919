"""Multigrid-accelerated canonical polyadic (CP) tensor decomposition."""
