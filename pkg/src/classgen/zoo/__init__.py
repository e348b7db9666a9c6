from .datasets import (ImageDataset, load_dataset, load_digits28, load_idx_dir,
                       load_image_folder, split_dataset, DIGIT_NAMES)
from .nets import (build_classifier, build_dual_encoder, build_reconstruction,
                   ConvInpainter, ImageEncoderNet, TextEncoderNet,
                   CLASSIFIER_PRESETS)
from .store import (load_classifier, load_dual_encoder, load_model,
                    load_reconstruction, save_classifier, save_dual_encoder,
                    save_reconstruction)
from .train import (TrainConfig, evaluate_accuracy, masked_reconstruction_loss,
                    probe_batch_and_masks, train_classifier, train_dual_encoder,
                    train_masked_autoencoder, ACCURACY_FLOORS)
