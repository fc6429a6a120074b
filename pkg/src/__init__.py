# Visual-Inertial Capture Toolkit Package