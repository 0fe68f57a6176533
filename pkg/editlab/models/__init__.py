"""Pydantic models for experiment configs, requests and reports."""
