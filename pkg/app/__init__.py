# app/__init__.py
"""
Co-evolutionary semi-supervised GAN training (CE-SSLGAN) on numpy.
"""
