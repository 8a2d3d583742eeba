# KAM reduction to a block normal form
