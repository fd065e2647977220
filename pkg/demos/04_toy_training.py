# A short training run on synthetic images with the masked rate-distortion loss.
# Run: python demos/04_toy_training.py   (about 20 s)
from emic.train import synthetic_images, train, training_masks

images = synthetic_images(16, seed=0)
masks = training_masks(16, 64, 64, seed=0)  # visible ratios cycle 0.5, 0.75, 1.0

result = train(images, masks, steps=200, batch=4, lam=0.01, seed=0, log=print)
print("initial loss %.3f -> final %.3f (ratio %.3f) in %.1fs"
      % (result.initial_loss, result.final_loss, result.ratio, result.seconds))
print("epochs:", result.state.epoch, "lr:", result.state.lr)
