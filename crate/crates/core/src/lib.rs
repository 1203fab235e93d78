pub mod corpus;
pub mod decode;
pub mod dust;
pub mod lm;
pub mod nnet;
pub mod pipeline;
pub mod seeding;
pub mod stats;
pub mod textdist;
