pub(crate) mod channel;
pub(crate) mod conv;
pub(crate) mod loss;
pub(crate) mod pointwise;
pub(crate) mod reduce;
pub(crate) mod resample;
