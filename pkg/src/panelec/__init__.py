"""Stratified two-way error-component models for unbalanced panels."""
