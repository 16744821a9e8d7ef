"""Two-stage text-to-3D optimisation with a voxel self-prior."""
