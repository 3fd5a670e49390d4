# Network package
