"""Small-training-set aortic aneurysm segmentation: U-Net with hand-written
backpropagation, gray-value/translation augmentation, largest-component
cleanup, marching cubes, and DSC / cloud-to-mesh evaluation."""

__version__ = "0.1.0"
