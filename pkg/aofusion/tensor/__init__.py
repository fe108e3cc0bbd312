"""Dense containers and numerical kernels shared by all factor updates"""
