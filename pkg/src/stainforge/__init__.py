"""stainforge: desk-scale H&E -> multiplex-immunofluorescence translation pipeline."""

__version__ = "0.1.0"
