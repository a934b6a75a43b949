from kpdeblur.cli import entry

entry()
