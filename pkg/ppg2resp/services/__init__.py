# Signal processing, diffusion, network, training and evaluation services
