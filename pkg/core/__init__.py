# core/__init__.py
"""
Core package – configuration, logging, exceptions and run tracking.
"""
