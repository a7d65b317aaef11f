//! Detection, mask and recognition heads with their losses.

pub mod detection;
pub mod losses;
pub mod recognition;

pub use detection::{
    box_area, box_iou, cell_center, dense_targets, mask_target, match_proposals_to_gt, propose_gt_guided, propose_learned, DenseHead,
    DenseHeadConfig, DenseOutput, DenseTargets, MaskHead, MaskHeadConfig, Proposal, ProposalMode, RoiBox,
};
pub use losses::{
    detection_loss, focal_loss, giou_loss, joint_loss, l1_loss, mask_loss, recognition_loss, sigmoid_focal_loss,
    Lambdas, LossBreakdown, LossComponents, LossVars,
};
pub use recognition::{char_of, class_of, decode_greedy, encode_target, RecognitionOutput, Recognizer, RecognizerConfig, EOS, NUM_CLASSES};
