"""Library modules of the hypokernel runner"""
