# PPG-to-respiration conditional diffusion pipeline
