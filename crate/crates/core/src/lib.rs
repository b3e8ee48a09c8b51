pub mod autodiff;
pub mod corpus;
pub mod encoders;
pub mod eval;
pub mod gradcheck;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod tensor;
pub mod user_model;
